#include "moss/losses.h"

#include <stdexcept>

namespace moss {

Tensor velocity_matching_loss(const Tensor& x, const Tensor& eps,
                              const Tensor& pred, Tape* tape) {
    if (x.shape() != eps.shape() || x.shape() != pred.shape())
        throw std::runtime_error("velocity_matching_loss: shape mismatch " +
                                 x.shape_str() + " vs " + eps.shape_str() +
                                 " vs " + pred.shape_str());
    Tensor target = ops::sub(x, eps, tape);
    return ops::mse(pred, target, tape);
}

Tensor combine_losses(const Tensor& l_act, const std::vector<Tensor>& l_phy,
                      double lambda_phy, Tape* tape) {
    if (lambda_phy < 0.0)
        throw std::runtime_error("combine_losses: lambda_phy must be >= 0");
    Tensor phy_sum;
    for (const Tensor& l : l_phy)
        phy_sum = phy_sum.defined() ? ops::add(phy_sum, l, tape) : l;
    if (!phy_sum.defined()) {
        if (!l_act.defined())
            throw std::runtime_error("combine_losses: nothing to combine");
        return l_act;
    }
    Tensor scaled = ops::scale(phy_sum, lambda_phy, tape);
    return l_act.defined() ? ops::add(l_act, scaled, tape) : scaled;
}

LossBreakdown make_breakdown(const Tensor& total, const Tensor& l_act,
                             const std::vector<std::string>& names,
                             const std::vector<Tensor>& l_phy,
                             double lambda_phy) {
    if (names.size() != l_phy.size())
        throw std::runtime_error(
            "make_breakdown: one name per physical loss required");
    LossBreakdown out;
    out.lambda_phy = lambda_phy;
    out.l_act = l_act.defined() ? l_act.item() : 0.0;
    for (std::size_t i = 0; i < names.size(); ++i)
        out.l_phy_per_modality.emplace_back(names[i], l_phy[i].item());
    out.l_total = total.item();
    return out;
}

} // namespace moss
