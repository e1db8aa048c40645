#include "vcpseg/loss.hpp"

#include "vcpseg/errors.hpp"

namespace vcpseg {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void validate_mask(const VectorXd& mask) {
    for (Eigen::Index i = 0; i < mask.size(); ++i)
        if (mask(i) != 0.0 && mask(i) != 1.0)
            throw InvalidMask("mask entries must be exactly 0 or 1");
}

ad::Var focal_loss_ad(const ad::Var& map, const VectorXd& mask, double gamma, double eps) {
    if (gamma < 0.0) throw ConfigError("focal gamma must be >= 0");
    if (map->cols() != 2 || map->rows() != mask.size())
        throw ShapeMismatch("focal_loss: map must be hw x 2 matching the mask");
    validate_mask(mask);

    ad::Var sel_abn = ad::constant(mask);
    ad::Var sel_nrm = ad::constant((1.0 - mask.array()).matrix());
    ad::Var p_t = ad::add(ad::mul(ad::cols(map, 1, 1), sel_abn),
                          ad::mul(ad::cols(map, 0, 1), sel_nrm));
    ad::Var one_minus = ad::add_const(ad::scale(p_t, -1.0), 1.0);
    ad::Var term = ad::mul(ad::pow_const(one_minus, gamma), ad::log_maxeps(p_t, eps));
    return ad::scale(ad::mean(term), -1.0);
}

double focal_loss(const MatrixXd& map, const VectorXd& mask, double gamma, double eps) {
    return focal_loss_ad(ad::constant(map), mask, gamma, eps)->val(0, 0);
}

ad::Var dice_loss_ad(const ad::Var& abnormal, const VectorXd& mask, double smooth) {
    if (abnormal->cols() != 1 || abnormal->rows() != mask.size())
        throw ShapeMismatch("dice_loss: abnormal channel must be hw x 1 matching the mask");
    validate_mask(mask);

    ad::Var inter = ad::sum(ad::mul(abnormal, ad::constant(mask)));
    ad::Var num = ad::add_const(ad::scale(inter, 2.0), smooth);
    ad::Var den = ad::add_const(ad::sum(abnormal), mask.sum() + smooth);
    return ad::add_const(ad::scale(ad::div_scalar(num, den), -1.0), 1.0);
}

double dice_loss(const VectorXd& abnormal, const VectorXd& mask, double smooth) {
    return dice_loss_ad(ad::constant(abnormal), mask, smooth)->val(0, 0);
}

ad::Var total_loss_ad(const std::vector<ad::Var>& m1, const std::vector<ad::Var>& m2,
                      const VectorXd& mask, double gamma, double smooth,
                      LossBreakdown* breakdown) {
    if (m1.size() != m2.size() || m1.empty())
        throw ConfigError("total_loss: branches must carry the same non-zero layer count");

    LossBreakdown bd;
    ad::Var total;
    auto accumulate = [&](const std::vector<ad::Var>& maps, double& focal_acc, double& dice_acc) {
        for (const auto& m : maps) {
            ad::Var f = focal_loss_ad(m, mask, gamma);
            ad::Var d = dice_loss_ad(ad::cols(m, 1, 1), mask, smooth);
            focal_acc += f->val(0, 0);
            dice_acc += d->val(0, 0);
            ad::Var term = ad::add(f, d);
            total = total ? ad::add(total, term) : term;
        }
    };
    accumulate(m1, bd.focal_m1, bd.dice_m1);
    accumulate(m2, bd.focal_m2, bd.dice_m2);
    if (breakdown) *breakdown = bd;
    return total;
}

double total_loss(const std::vector<MatrixXd>& m1, const std::vector<MatrixXd>& m2,
                  const VectorXd& mask, double gamma, double smooth) {
    std::vector<ad::Var> v1, v2;
    for (const auto& m : m1) v1.push_back(ad::constant(m));
    for (const auto& m : m2) v2.push_back(ad::constant(m));
    return total_loss_ad(v1, v2, mask, gamma, smooth)->val(0, 0);
}

}  // namespace vcpseg
