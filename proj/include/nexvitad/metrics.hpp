#pragma once

#include <vector>

#include "nexvitad/tensor.hpp"

namespace nexvitad {

// Pixel-level evaluation metrics. AUC and AP group tied scores, so both agree
// with their rank-statistic / threshold-enumeration definitions exactly.

// trapezoidal area under the ROC curve; requires both classes present
real auc(const std::vector<real>& scores, const std::vector<int>& labels);

// sum over descending thresholds of (R_n - R_{n-1}) * P_n; requires >=1 positive
real average_precision(const std::vector<real>& scores, const std::vector<int>& labels);

enum class ProMode { Fixed, BestSweep };

struct ProResult {
    real value = 0.0;
    real tau = 0.0;
    std::vector<real> per_image; // IoU of each image that entered the mean
};

// Mean IoU between the binarized score maps and ground truth across test
// images; maps are min-max normalized per image before thresholding. Images
// with empty ground truth are excluded (IoU undefined at 0/0). BestSweep
// reports the best mean over 101 evenly spaced thresholds.
ProResult pro_mean_iou(const std::vector<Tensor>& score_maps, const std::vector<Tensor>& gt_masks,
                       ProMode mode, real fixed_tau = 0.5);

} // namespace nexvitad
