#include "vcpseg/metrics.hpp"

#include "vcpseg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>

namespace vcpseg::metrics {

bool ScoredSample::anomalous() const {
    for (auto v : mask)
        if (v) return true;
    return false;
}

double auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size()) throw ShapeMismatch("auroc: size mismatch");
    const std::size_t n = scores.size();
    std::size_t pos = 0;
    for (auto l : labels) pos += (l != 0);
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0)
        throw UndefinedMetric("AUROC needs both classes in the pooled set");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average ranks over ties, 1-based
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]]) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double u = rank_sum_pos - static_cast<double>(pos) * (static_cast<double>(pos) + 1.0) / 2.0;
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double average_precision(const std::vector<double>& scores,
                         const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size()) throw ShapeMismatch("average_precision: size mismatch");
    const std::size_t n = scores.size();
    std::size_t pos = 0;
    for (auto l : labels) pos += (l != 0);
    if (pos == 0) throw UndefinedMetric("AP needs at least one positive");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double ap = 0.0, recall_prev = 0.0;
    std::size_t tp = 0, fp = 0, i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[order[k]])
                ++tp;
            else
                ++fp;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j + 1;
    }
    return ap;
}

namespace {

void pool_pixels(const std::vector<ScoredSample>& samples, std::vector<double>& scores,
                 std::vector<std::uint8_t>& labels) {
    std::size_t total = 0;
    for (const auto& s : samples) total += s.mask.size();
    scores.reserve(total);
    labels.reserve(total);
    for (const auto& s : samples) {
        if (s.scores.size() != static_cast<Eigen::Index>(s.mask.size()))
            throw ShapeMismatch("sample score/mask size mismatch");
        for (Eigen::Index i = 0; i < s.scores.size(); ++i) {
            scores.push_back(s.scores(i));
            labels.push_back(s.mask[static_cast<std::size_t>(i)]);
        }
    }
}

}  // namespace

double pixel_auroc(const std::vector<ScoredSample>& samples) {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    pool_pixels(samples, scores, labels);
    return auroc(scores, labels);
}

double pixel_ap(const std::vector<ScoredSample>& samples) {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    pool_pixels(samples, scores, labels);
    return average_precision(scores, labels);
}

std::pair<std::vector<int>, int> connected_components(const std::vector<std::uint8_t>& mask,
                                                      int h, int w) {
    if (static_cast<int>(mask.size()) != h * w)
        throw ShapeMismatch("connected_components: mask size mismatch");
    std::vector<int> parent(mask.size());
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int x) {
        while (parent[static_cast<std::size_t>(x)] != x) {
            parent[static_cast<std::size_t>(x)] =
                parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
            x = parent[static_cast<std::size_t>(x)];
        }
        return x;
    };
    auto unite = [&](int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
    };

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int idx = y * w + x;
            if (!mask[static_cast<std::size_t>(idx)]) continue;
            // union with already-visited neighbors (W, NW, N, NE)
            const int dx[] = {-1, -1, 0, 1};
            const int dy[] = {0, -1, -1, -1};
            for (int k = 0; k < 4; ++k) {
                const int nx = x + dx[k], ny = y + dy[k];
                if (nx < 0 || nx >= w || ny < 0) continue;
                const int nidx = ny * w + nx;
                if (mask[static_cast<std::size_t>(nidx)]) unite(idx, nidx);
            }
        }

    std::vector<int> labels(mask.size(), 0);
    std::vector<int> remap(mask.size(), 0);
    int count = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        const int root = find(static_cast<int>(i));
        if (remap[static_cast<std::size_t>(root)] == 0) remap[static_cast<std::size_t>(root)] = ++count;
        labels[i] = remap[static_cast<std::size_t>(root)];
    }
    return {labels, count};
}

double pro(const std::vector<ScoredSample>& samples, double fpr_limit, int steps) {
    if (fpr_limit <= 0.0 || fpr_limit > 1.0) throw ConfigError("pro: fpr_limit must be in (0, 1]");

    struct Pixel {
        double score;
        int component;  // global id, -1 for negatives
    };
    std::vector<Pixel> pixels;
    std::vector<double> comp_size;
    std::size_t neg_total = 0;

    for (const auto& s : samples) {
        auto [labels, count] = connected_components(s.mask, s.h, s.w);
        const int base = static_cast<int>(comp_size.size());
        for (int c = 0; c < count; ++c) comp_size.push_back(0.0);
        for (std::size_t i = 0; i < s.mask.size(); ++i) {
            const int comp = labels[i] ? base + labels[i] - 1 : -1;
            if (comp >= 0)
                comp_size[static_cast<std::size_t>(comp)] += 1.0;
            else
                ++neg_total;
            pixels.push_back({s.scores(static_cast<Eigen::Index>(i)), comp});
        }
    }
    if (comp_size.empty()) throw UndefinedMetric("PRO needs at least one anomalous region");
    if (neg_total == 0) throw UndefinedMetric("PRO needs negative pixels for the FPR axis");

    std::sort(pixels.begin(), pixels.end(),
              [](const Pixel& a, const Pixel& b) { return a.score > b.score; });

    // distinct-score groups; only gigantic pools get rank-subsampled
    std::size_t group_count = 0;
    for (std::size_t i = 0; i < pixels.size();) {
        std::size_t j = i;
        while (j + 1 < pixels.size() && pixels[j + 1].score == pixels[i].score) ++j;
        ++group_count;
        i = j + 1;
    }
    const std::size_t cap = steps > 0 ? static_cast<std::size_t>(steps) * 1000 : group_count;
    const std::size_t stride = group_count > cap ? (group_count + cap - 1) / cap : 1;

    const double n_comp = static_cast<double>(comp_size.size());
    double cover_sum = 0.0;  // sum over components of covered / size
    std::size_t fp = 0;
    double prev_fpr = 0.0, prev_pro = 0.0, area = 0.0;
    bool capped = false;

    std::size_t group_idx = 0;
    for (std::size_t i = 0; i < pixels.size() && !capped;) {
        std::size_t j = i;
        while (j + 1 < pixels.size() && pixels[j + 1].score == pixels[i].score) ++j;
        for (std::size_t k = i; k <= j; ++k) {
            if (pixels[k].component >= 0)
                cover_sum += 1.0 / comp_size[static_cast<std::size_t>(pixels[k].component)];
            else
                ++fp;
        }
        ++group_idx;
        i = j + 1;
        const bool last = (i >= pixels.size());
        if (group_idx % stride != 0 && !last) continue;

        const double fpr = static_cast<double>(fp) / static_cast<double>(neg_total);
        const double pro_val = cover_sum / n_comp;
        if (fpr >= fpr_limit) {
            // interpolate the curve exactly at the integration limit
            const double t =
                (fpr > prev_fpr) ? (fpr_limit - prev_fpr) / (fpr - prev_fpr) : 0.0;
            const double pro_at_limit = prev_pro + t * (pro_val - prev_pro);
            area += 0.5 * (prev_pro + pro_at_limit) * (fpr_limit - prev_fpr);
            capped = true;
            break;
        }
        area += 0.5 * (prev_pro + pro_val) * (fpr - prev_fpr);
        prev_fpr = fpr;
        prev_pro = pro_val;
    }
    if (!capped) {
        // pooled FPR never reached the limit; extend the last value flat
        area += prev_pro * (fpr_limit - prev_fpr);
    }
    return area / fpr_limit;
}

std::pair<double, double> image_metrics(const std::vector<ScoredSample>& samples) {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    scores.reserve(samples.size());
    labels.reserve(samples.size());
    for (const auto& s : samples) {
        scores.push_back(s.image_score);
        labels.push_back(s.anomalous() ? 1 : 0);
    }
    return {auroc(scores, labels), average_precision(scores, labels)};
}

namespace {

std::string pct(double v, bool defined) {
    if (!defined) return "--";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", v * 100.0);
    return buf;
}

}  // namespace

EvalReport build_report(const std::vector<ProductMetrics>& rows) {
    if (rows.empty()) throw UndefinedMetric("cannot build a report from zero products");
    EvalReport rep;
    rep.rows = rows;
    ProductMetrics mean;
    mean.product = "mean";
    int n_pixel = 0, n_image = 0;
    for (const auto& r : rows) {
        if (r.has_pixel) {
            mean.auroc += r.auroc;
            mean.pro += r.pro;
            mean.ap += r.ap;
            ++n_pixel;
        }
        if (r.has_image) {
            mean.image_auroc += r.image_auroc;
            mean.image_ap += r.image_ap;
            ++n_image;
        }
    }
    if (n_pixel > 0) {
        mean.auroc /= n_pixel;
        mean.pro /= n_pixel;
        mean.ap /= n_pixel;
        mean.has_pixel = true;
    }
    if (n_image > 0) {
        mean.image_auroc /= n_image;
        mean.image_ap /= n_image;
        mean.has_image = true;
    }
    rep.mean = mean;
    return rep;
}

std::string EvalReport::render_table() const {
    std::size_t name_w = 7;
    for (const auto& r : rows) name_w = std::max(name_w, r.product.size());
    auto line = [&](const ProductMetrics& r) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%-*s  %7s %7s %7s %9s %7s\n", static_cast<int>(name_w),
                      r.product.c_str(), pct(r.auroc, r.has_pixel).c_str(),
                      pct(r.pro, r.has_pixel).c_str(), pct(r.ap, r.has_pixel).c_str(),
                      pct(r.image_auroc, r.has_image).c_str(),
                      pct(r.image_ap, r.has_image).c_str());
        return std::string(buf);
    };
    char head[256];
    std::snprintf(head, sizeof(head), "%-*s  %7s %7s %7s %9s %7s\n", static_cast<int>(name_w),
                  "product", "AUROC", "PRO", "AP", "I-AUROC", "I-AP");
    std::string out = head;
    for (const auto& r : rows) out += line(r);
    out += line(mean);
    return out;
}

std::string EvalReport::render_csv() const {
    std::string out = "product,auroc,pro,ap,image_auroc,image_ap\n";
    auto line = [&](const ProductMetrics& r) {
        std::string s = r.product;
        s += "," + (r.has_pixel ? pct(r.auroc, true) : std::string());
        s += "," + (r.has_pixel ? pct(r.pro, true) : std::string());
        s += "," + (r.has_pixel ? pct(r.ap, true) : std::string());
        s += "," + (r.has_image ? pct(r.image_auroc, true) : std::string());
        s += "," + (r.has_image ? pct(r.image_ap, true) : std::string());
        return s + "\n";
    };
    for (const auto& r : rows) out += line(r);
    out += line(mean);
    return out;
}

}  // namespace vcpseg::metrics
