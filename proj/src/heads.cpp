#include "vcpseg/heads.hpp"

#include "vcpseg/errors.hpp"

#include <cmath>

namespace vcpseg {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

namespace {

constexpr double kTauInit = 0.07;

MatrixXd gauss_mat(Rng& rng, int r, int c, double stddev) {
    MatrixXd m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.gaussian(0.0, stddev);
    return m;
}

}  // namespace

HeadParams init_head_params(const BackboneConfig& cfg, int num_heads, bool shared,
                            bool attention_scaling, Rng& rng) {
    if (num_heads < 1 || cfg.text_width % num_heads != 0)
        throw ConfigError("attention head count must divide the joint width C");

    HeadParams h;
    h.shared = shared;
    h.num_heads = num_heads;
    h.attention_scaling = attention_scaling;
    const int sets = shared ? 1 : static_cast<int>(cfg.tap_layers.size());
    const double sc = 1.0 / std::sqrt(static_cast<double>(cfg.text_width));
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.image_width));
    for (int k = 0; k < sets; ++k) {
        TapHeadParams t;
        t.joint_w = ad::leaf(gauss_mat(rng, cfg.image_width, cfg.text_width, sd));
        t.joint_b = ad::leaf(MatrixXd::Zero(1, cfg.text_width));
        t.wq = ad::leaf(gauss_mat(rng, cfg.text_width, cfg.text_width, sc));
        t.wk = ad::leaf(gauss_mat(rng, cfg.image_width, cfg.text_width, sd));
        t.wv = ad::leaf(gauss_mat(rng, cfg.image_width, cfg.text_width, sd));
        t.wo = ad::leaf(gauss_mat(rng, cfg.text_width, cfg.image_width, sc));
        h.taps.push_back(std::move(t));
    }
    h.log_tau1 = ad::leaf(MatrixXd::Constant(1, 1, std::log(kTauInit)));
    h.log_tau2 = ad::leaf(MatrixXd::Constant(1, 1, std::log(kTauInit)));
    return h;
}

ad::Var temperature_ad(const ad::Var& log_tau) {
    return ad::clamp(ad::exp(log_tau), 0.01, 1.0);
}

double clamp_temperature(double tau) { return std::clamp(tau, 0.01, 1.0); }

ad::Var baseline_logits_ad(const ad::Var& patch, const TapHeadParams& tap, const ad::Var& f_t) {
    ad::Var joint = ad::add_rowvec(ad::matmul(patch, tap.joint_w), tap.joint_b);
    return ad::matmul_nt(ad::row_l2_normalize(joint), ad::row_l2_normalize(f_t));
}

ad::Var post_vcp_logits_ad(const ad::Var& patch_normed, const ad::Var& o_t) {
    return ad::matmul_nt(patch_normed, ad::row_l2_normalize(o_t));
}

ad::Var baseline_map_ad(const ad::Var& patch, const TapHeadParams& tap, const ad::Var& f_t,
                        const ad::Var& tau1, int grid_h, int grid_w, int out_h, int out_w) {
    if (tau1->val(0, 0) <= 0.0) throw InvalidTemperature("tau1 must be positive");
    ad::Var logits = baseline_logits_ad(patch, tap, f_t);
    ad::Var up = ad::upsample_bilinear(logits, grid_h, grid_w, out_h, out_w);
    return ad::row_softmax(ad::div_scalar(up, tau1));
}

MatrixXd baseline_map(const MatrixXd& patch, const MatrixXd& joint_w, const RowVectorXd& joint_b,
                      const MatrixXd& f_t, double tau1, int grid_h, int grid_w, int out_h,
                      int out_w) {
    if (tau1 <= 0.0) throw InvalidTemperature("tau1 must be positive");
    TapHeadParams tap;
    tap.joint_w = ad::constant(joint_w);
    tap.joint_b = ad::constant(joint_b);
    return baseline_map_ad(ad::constant(patch), tap, ad::constant(f_t),
                           ad::scalar(tau1), grid_h, grid_w, out_h, out_w)
        ->val;
}

PostVcpResult post_vcp_update_ad(const ad::Var& patch, const TapHeadParams& tap,
                                 const ad::Var& f_t, int num_heads, bool attention_scaling) {
    const int width = tap.wq->cols();
    if (width % num_heads != 0) throw ConfigError("C must divide by the head count M");
    const int dh = width / num_heads;

    ad::Var q = ad::matmul(f_t, tap.wq);    // 2 x C
    ad::Var k = ad::matmul(patch, tap.wk);  // HW x C
    ad::Var v = ad::matmul(patch, tap.wv);  // HW x C

    PostVcpResult res;
    std::vector<ad::Var> outs;
    outs.reserve(static_cast<std::size_t>(num_heads));
    for (int m = 0; m < num_heads; ++m) {
        ad::Var scores = ad::matmul_nt(ad::cols(q, m * dh, dh), ad::cols(k, m * dh, dh));
        if (attention_scaling) scores = ad::scale(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
        ad::Var att = ad::row_softmax(scores);  // 2 x HW
        res.attention.push_back(att->val);
        outs.push_back(ad::matmul(att, ad::cols(v, m * dh, dh)));
    }
    res.o_t = ad::matmul(ad::hconcat(outs), tap.wo);  // 2 x d_I
    return res;
}

PostVcpPlain post_vcp_update(const MatrixXd& patch, const MatrixXd& wq, const MatrixXd& wk,
                             const MatrixXd& wv, const MatrixXd& wo, const MatrixXd& f_t,
                             int num_heads, bool attention_scaling) {
    TapHeadParams tap;
    tap.wq = ad::constant(wq);
    tap.wk = ad::constant(wk);
    tap.wv = ad::constant(wv);
    tap.wo = ad::constant(wo);
    PostVcpResult r =
        post_vcp_update_ad(ad::constant(patch), tap, ad::constant(f_t), num_heads, attention_scaling);
    return PostVcpPlain{r.o_t->val, std::move(r.attention)};
}

ad::Var post_vcp_map_ad(const ad::Var& patch_normed, const ad::Var& o_t, const ad::Var& tau2,
                        int grid_h, int grid_w, int out_h, int out_w) {
    if (tau2->val(0, 0) <= 0.0) throw InvalidTemperature("tau2 must be positive");
    ad::Var logits = post_vcp_logits_ad(patch_normed, o_t);
    ad::Var up = ad::upsample_bilinear(logits, grid_h, grid_w, out_h, out_w);
    return ad::row_softmax(ad::div_scalar(up, tau2));
}

MatrixXd post_vcp_map(const MatrixXd& patch, const MatrixXd& o_t, double tau2, int grid_h,
                      int grid_w, int out_h, int out_w) {
    if (tau2 <= 0.0) throw InvalidTemperature("tau2 must be positive");
    ad::Var zn = ad::row_l2_normalize(ad::constant(patch));
    return post_vcp_map_ad(zn, ad::constant(o_t), ad::scalar(tau2), grid_h, grid_w, out_h, out_w)
        ->val;
}

MatrixXd combine_layers(const std::vector<MatrixXd>& maps) {
    if (maps.empty()) throw ConfigError("combine_layers: no maps given");
    MatrixXd acc = maps[0];
    for (std::size_t i = 1; i < maps.size(); ++i) {
        if (maps[i].rows() != acc.rows() || maps[i].cols() != acc.cols())
            throw ShapeMismatch("combine_layers: map shapes disagree");
        acc += maps[i];
    }
    return acc / static_cast<double>(maps.size());
}

VectorXd fuse(const MatrixXd& m1, const MatrixXd& m2, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("fusion weight alpha must lie in [0, 1]");
    if (m1.rows() != m2.rows() || m1.cols() != 2 || m2.cols() != 2)
        throw ShapeMismatch("fuse: expected matching hw x 2 maps");
    return (1.0 - alpha) * m1.col(1) + alpha * m2.col(1);
}

RowVectorXd classification_weights(const MatrixXd& two_rows) {
    if (two_rows.rows() != 2) throw ShapeMismatch("classification_weights: expected two rows");
    const double n0 = two_rows.row(0).norm();
    const double n1 = two_rows.row(1).norm();
    if (n0 == 0.0 || n1 == 0.0)
        throw DegenerateEmbedding("cannot normalize a zero embedding row");
    return two_rows.row(0) / n0 - two_rows.row(1) / n1;
}

}  // namespace vcpseg
