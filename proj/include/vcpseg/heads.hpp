#pragma once

#include "vcpseg/autodiff.hpp"
#include "vcpseg/backbone.hpp"
#include "vcpseg/util.hpp"

#include <vector>

namespace vcpseg {

// Trainable parameters of one tap layer's heads. joint_* is the linear map
// into the joint space for the baseline branch; the w* matrices drive the
// cross-attention text update.
struct TapHeadParams {
    ad::Var joint_w;  // d_I x C
    ad::Var joint_b;  // 1 x C
    ad::Var wq;       // C x C
    ad::Var wk;       // d_I x C
    ad::Var wv;       // d_I x C
    ad::Var wo;       // C x d_I
};

struct HeadParams {
    std::vector<TapHeadParams> taps;  // one per tap layer, or a single shared set
    bool shared = false;
    int num_heads = 8;             // M
    bool attention_scaling = false;  // extra 1/sqrt(C/M) on the attention logits
    ad::Var log_tau1;              // 1x1, temperature stored as log
    ad::Var log_tau2;

    const TapHeadParams& tap(int k) const { return taps[shared ? 0 : static_cast<std::size_t>(k)]; }
};

HeadParams init_head_params(const BackboneConfig& cfg, int num_heads, bool shared,
                            bool attention_scaling, Rng& rng);

// clamp(exp(log_tau), 0.01, 1.0)
ad::Var temperature_ad(const ad::Var& log_tau);

// Pre-upsample cosine logits (HW x 2) of each branch.
ad::Var baseline_logits_ad(const ad::Var& patch, const TapHeadParams& tap, const ad::Var& f_t);
ad::Var post_vcp_logits_ad(const ad::Var& patch_normed, const ad::Var& o_t);

// Both map producers follow the same composition: cosine logits in the
// relevant space, bilinear upsample to (h, w), divide by the temperature,
// then the two-class softmax.
ad::Var baseline_map_ad(const ad::Var& patch, const TapHeadParams& tap, const ad::Var& f_t,
                        const ad::Var& tau1, int grid_h, int grid_w, int out_h, int out_w);
Eigen::MatrixXd baseline_map(const Eigen::MatrixXd& patch, const Eigen::MatrixXd& joint_w,
                             const Eigen::RowVectorXd& joint_b, const Eigen::MatrixXd& f_t,
                             double tau1, int grid_h, int grid_w, int out_h, int out_w);

struct PostVcpResult {
    ad::Var o_t;                             // 2 x d_I
    std::vector<Eigen::MatrixXd> attention;  // M heads, each 2 x HW
};
PostVcpResult post_vcp_update_ad(const ad::Var& patch, const TapHeadParams& tap,
                                 const ad::Var& f_t, int num_heads, bool attention_scaling);
struct PostVcpPlain {
    Eigen::MatrixXd o_t;
    std::vector<Eigen::MatrixXd> attention;
};
PostVcpPlain post_vcp_update(const Eigen::MatrixXd& patch, const Eigen::MatrixXd& wq,
                             const Eigen::MatrixXd& wk, const Eigen::MatrixXd& wv,
                             const Eigen::MatrixXd& wo, const Eigen::MatrixXd& f_t, int num_heads,
                             bool attention_scaling = false);

ad::Var post_vcp_map_ad(const ad::Var& patch_normed, const ad::Var& o_t, const ad::Var& tau2,
                        int grid_h, int grid_w, int out_h, int out_w);
Eigen::MatrixXd post_vcp_map(const Eigen::MatrixXd& patch, const Eigen::MatrixXd& o_t, double tau2,
                             int grid_h, int grid_w, int out_h, int out_w);

// Mean over tap layers; keeps the per-pixel channel simplex.
Eigen::MatrixXd combine_layers(const std::vector<Eigen::MatrixXd>& maps);

// Convex fusion of the abnormal channels: (1 - alpha) * m1 + alpha * m2.
Eigen::VectorXd fuse(const Eigen::MatrixXd& m1, const Eigen::MatrixXd& m2, double alpha);

// g = normalize(row 0) - normalize(row 1); rows are (normal, abnormal).
Eigen::RowVectorXd classification_weights(const Eigen::MatrixXd& two_rows);

// mirror of temperature_ad for plain pipelines
double clamp_temperature(double tau);

}  // namespace vcpseg
