#pragma once

#include "vcpseg/autodiff.hpp"

#include <vector>

namespace vcpseg {

// Masks are flat hw x 1 vectors with entries exactly 0 or 1 (1 = anomalous).
void validate_mask(const Eigen::VectorXd& mask);

// mean over pixels of -(1 - p_t)^gamma * log(p_t), p_t read from the
// abnormal channel where the mask is 1 and the normal channel elsewhere.
// The log is guarded as log(max(p_t, eps)).
ad::Var focal_loss_ad(const ad::Var& map, const Eigen::VectorXd& mask, double gamma,
                      double eps = 1e-8);
double focal_loss(const Eigen::MatrixXd& map, const Eigen::VectorXd& mask, double gamma,
                  double eps = 1e-8);

// 1 - (2 * sum(abn * S) + smooth) / (sum(abn) + sum(S) + smooth)
ad::Var dice_loss_ad(const ad::Var& abnormal, const Eigen::VectorXd& mask, double smooth);
double dice_loss(const Eigen::VectorXd& abnormal, const Eigen::VectorXd& mask, double smooth);

struct LossBreakdown {
    double focal_m1 = 0, dice_m1 = 0, focal_m2 = 0, dice_m2 = 0;
    double total() const { return focal_m1 + dice_m1 + focal_m2 + dice_m2; }
};

// Sum over tap layers of focal + dice on both branches; dice consumes the
// abnormal channel. breakdown, when given, receives the four partial sums.
ad::Var total_loss_ad(const std::vector<ad::Var>& m1, const std::vector<ad::Var>& m2,
                      const Eigen::VectorXd& mask, double gamma, double smooth,
                      LossBreakdown* breakdown = nullptr);
double total_loss(const std::vector<Eigen::MatrixXd>& m1, const std::vector<Eigen::MatrixXd>& m2,
                  const Eigen::VectorXd& mask, double gamma, double smooth);

}  // namespace vcpseg
