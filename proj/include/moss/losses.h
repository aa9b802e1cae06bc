#pragma once

#include <string>
#include <utility>
#include <vector>

#include "moss/ops.h"
#include "moss/tape.h"
#include "moss/tensor.h"

namespace moss {

struct LossBreakdown {
    double l_act = 0.0;
    std::vector<std::pair<std::string, double>> l_phy_per_modality;
    double l_total = 0.0;
    double lambda_phy = 0.0;

    double phy_sum() const {
        double s = 0.0;
        for (const auto& [name, v] : l_phy_per_modality)
            s += v;
        return s;
    }
};

// mean(((x - eps) - pred)^2): the flow-matching velocity regression. Works
// for the action chunk and for each physical future chunk alike.
Tensor velocity_matching_loss(const Tensor& x, const Tensor& eps,
                              const Tensor& pred, Tape* tape);

// Composes the total objective: l_act + lambda * sum(l_phy), with the sum
// accumulated in modality order. Pass an undefined l_act for the
// stage-1 objective (lambda * sum(l_phy) alone).
Tensor combine_losses(const Tensor& l_act, const std::vector<Tensor>& l_phy,
                      double lambda_phy, Tape* tape);

LossBreakdown make_breakdown(const Tensor& total, const Tensor& l_act,
                             const std::vector<std::string>& names,
                             const std::vector<Tensor>& l_phy,
                             double lambda_phy);

} // namespace moss
